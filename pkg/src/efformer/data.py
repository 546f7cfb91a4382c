"""Clip records, file I/O, neighbor selection, length bins and synthetic data.

Clips CSV (UTF-8, LF, header required)::

    clip_id,frame,participant,role,u,v,action

one row per participant and frame; ``frame`` runs 1..T; ``role`` is
``observed`` or ``target``; ``action`` is an index into the manifest's
action vocabulary. The manifest is JSON::

    {"width": 640, "height": 480, "fps": 2.5, "actions": [...],
     "n_obs": 3, "n_tgt": 1}
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import geometric_features, one_hot

CSV_HEADER = ["clip_id", "frame", "participant", "role", "u", "v", "action"]
ROLES = ("observed", "target")

PURSUIT_ACTIONS = ["stand", "move E", "move NE", "move N", "move NW",
                   "move W", "move SW", "move S", "move SE"]
DANCE_ACTIONS = ["stand", "walk left", "walk right", "walk up", "walk down", "twirling"]


class ClipFormatError(ValueError):
    """Malformed clip file or a clip that violates the record invariants."""


@dataclass
class Manifest:
    width: float
    height: float
    fps: float
    actions: list
    n_obs: int
    n_tgt: int

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "fps": self.fps,
                "actions": list(self.actions), "n_obs": self.n_obs, "n_tgt": self.n_tgt}

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        missing = {"width", "height", "fps", "actions", "n_obs", "n_tgt"} - set(d)
        if missing:
            raise ClipFormatError(f"manifest missing keys: {sorted(missing)}")
        return cls(float(d["width"]), float(d["height"]), float(d["fps"]), list(d["actions"]),
                   int(d["n_obs"]), int(d["n_tgt"]))


@dataclass
class ClipRecord:
    """One T-frame clip: positions ``[N, T, 2]`` and actions ``[N, T]``, rows sorted by id."""

    clip_id: str
    participants: list
    roles: list
    positions: np.ndarray
    actions: np.ndarray
    width: float
    height: float

    @property
    def n_frames(self) -> int:
        return self.positions.shape[1]

    @property
    def observed(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == "observed"]

    @property
    def targets(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == "target"]

    def rows(self):
        for i, pid in enumerate(self.participants):
            for t in range(self.n_frames):
                u, v = self.positions[i, t]
                yield (self.clip_id, t + 1, pid, self.roles[i], float(u), float(v), int(self.actions[i, t]))


@dataclass
class ClipBatch:
    """Stacked clips with observed and target rows split apart."""

    obs_pos: np.ndarray   # [B, No, T, 2]
    obs_act: np.ndarray   # [B, No, T]
    tgt_pos: np.ndarray   # [B, Nt, T, 2]
    tgt_act: np.ndarray   # [B, Nt, T]
    wh: np.ndarray        # [B, 2]
    clip_ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.obs_pos.shape[0]

    @property
    def n_frames(self) -> int:
        return self.obs_pos.shape[2]

    def subset(self, idx) -> "ClipBatch":
        idx = np.asarray(idx)
        return ClipBatch(self.obs_pos[idx], self.obs_act[idx], self.tgt_pos[idx], self.tgt_act[idx],
                         self.wh[idx], [self.clip_ids[i] for i in idx] if self.clip_ids else [])

    def obs_geo(self) -> np.ndarray:
        return geometric_features(self.obs_pos, self.wh[:, None, :])

    def tgt_geo(self) -> np.ndarray:
        return geometric_features(self.tgt_pos, self.wh[:, None, :])

    def onehots(self, n_actions: int) -> tuple[np.ndarray, np.ndarray]:
        return one_hot(self.obs_act, n_actions), one_hot(self.tgt_act, n_actions)


def to_batch(clips: list[ClipRecord]) -> ClipBatch:
    if not clips:
        raise ValueError("no clips to batch")
    obs = [c.observed for c in clips]
    tgt = [c.targets for c in clips]
    if len({len(o) for o in obs}) != 1 or len({len(t) for t in tgt}) != 1:
        raise ValueError("clips differ in observed/target counts")
    if len({c.n_frames for c in clips}) != 1:
        raise ValueError("clips differ in frame count")
    return ClipBatch(
        obs_pos=np.stack([c.positions[o] for c, o in zip(clips, obs)]),
        obs_act=np.stack([c.actions[o] for c, o in zip(clips, obs)]),
        tgt_pos=np.stack([c.positions[t] for c, t in zip(clips, tgt)]),
        tgt_act=np.stack([c.actions[t] for c, t in zip(clips, tgt)]),
        wh=np.array([[c.width, c.height] for c in clips], dtype=np.float64),
        clip_ids=[c.clip_id for c in clips],
    )


# ------------------------------------------------------------------ file I/O


def normalize(positions, w: float, h: float) -> np.ndarray:
    return np.asarray(positions, dtype=np.float64) / np.array([w, h])


def denormalize(coords, w: float, h: float) -> np.ndarray:
    return np.asarray(coords, dtype=np.float64) * np.array([w, h])


def write_clips(path, clips: list[ClipRecord], manifest: Manifest | None = None) -> None:
    """Write clips CSV; if ``manifest`` is given also write ``<stem>.json`` next to it."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for c in clips:
            for row in c.rows():
                w.writerow([row[0], row[1], row[2], row[3], repr(row[4]), repr(row[5]), row[6]])
    if manifest is not None:
        write_manifest(path.with_suffix(".json"), manifest)


def write_manifest(path, manifest: Manifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")


def read_manifest(path) -> Manifest:
    try:
        return Manifest.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise ClipFormatError(f"{path}: invalid JSON: {exc}") from exc


def load_clips(path, manifest: Manifest | None = None) -> list[ClipRecord]:
    """Read and validate clips; the manifest defaults to ``<stem>.json``."""
    path = Path(path)
    if manifest is None:
        manifest = read_manifest(path.with_suffix(".json"))
    text = path.read_text(encoding="utf-8")
    return parse_clips(text, manifest, source=str(path))


def parse_clips(text: str, manifest: Manifest, source: str = "<clips>") -> list[ClipRecord]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ClipFormatError(f"{source}: empty file") from None
    if [h.strip() for h in header] != CSV_HEADER:
        raise ClipFormatError(f"{source}:1: header must be {','.join(CSV_HEADER)}")
    n_actions = len(manifest.actions)
    data: dict[str, dict] = {}
    order: list[str] = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise ClipFormatError(f"{source}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
        clip_id, frame, pid, role, u, v, action = (x.strip() for x in row)
        try:
            frame_i, u_f, v_f, act = int(frame), float(u), float(v), int(action)
        except ValueError:
            raise ClipFormatError(f"{source}:{lineno}: non-numeric frame/u/v/action") from None
        if role not in ROLES:
            raise ClipFormatError(f"{source}:{lineno}: role {role!r} not in {ROLES}")
        if not 0 <= act < n_actions:
            raise ClipFormatError(f"{source}:{lineno}: action {act} outside vocabulary 0..{n_actions - 1}")
        if not (math.isfinite(u_f) and math.isfinite(v_f)):
            raise ClipFormatError(f"{source}:{lineno}: non-finite position")
        if frame_i < 1:
            raise ClipFormatError(f"{source}:{lineno}: frame must be >= 1")
        clip = data.get(clip_id)
        if clip is None:
            clip = data[clip_id] = {"cells": {}, "roles": {}}
            order.append(clip_id)
        key = (pid, frame_i)
        if key in clip["cells"]:
            raise ClipFormatError(f"{source}:{lineno}: duplicate row for clip {clip_id}, "
                                  f"participant {pid}, frame {frame_i}")
        prev_role = clip["roles"].setdefault(pid, role)
        if prev_role != role:
            raise ClipFormatError(f"{source}:{lineno}: participant {pid} changes role in clip {clip_id}")
        clip["cells"][key] = (u_f, v_f, act)

    clips = []
    for clip_id in order:
        cells, roles = data[clip_id]["cells"], data[clip_id]["roles"]
        pids = sorted(roles, key=_pid_key)
        T = max(f for _, f in cells)
        for pid in pids:
            for f in range(1, T + 1):
                if (pid, f) not in cells:
                    raise ClipFormatError(f"{source}: clip {clip_id}: participant {pid} missing frame {f}")
        pos = np.array([[cells[(p, f)][:2] for f in range(1, T + 1)] for p in pids], dtype=np.float64)
        act = np.array([[cells[(p, f)][2] for f in range(1, T + 1)] for p in pids], dtype=np.int64)
        rec = ClipRecord(clip_id, pids, [roles[p] for p in pids], pos, act,
                         manifest.width, manifest.height)
        _validate(rec, manifest, source)
        clips.append(rec)
    return clips


def _pid_key(pid: str):
    return (0, int(pid), pid) if pid.lstrip("-").isdigit() else (1, 0, pid)


def _validate(rec: ClipRecord, manifest: Manifest, source: str) -> None:
    n_obs, n_tgt = len(rec.observed), len(rec.targets)
    if n_tgt != manifest.n_tgt or n_obs != manifest.n_obs:
        raise ClipFormatError(f"{source}: clip {rec.clip_id}: has {n_obs} observed/{n_tgt} target, "
                              f"manifest says {manifest.n_obs}/{manifest.n_tgt}")
    if rec.n_frames < 2:
        raise ClipFormatError(f"{source}: clip {rec.clip_id}: needs at least 2 frames")


# ------------------------------------------------------------ neighbor selection


def select_neighbors(tracks: dict, target, k: int = 4) -> list:
    """The ``k`` participants closest to ``target`` by mean distance over all frames.

    ``tracks`` maps participant id to a ``[T, 2]`` array. Ties go to the
    smaller id.
    """
    if target not in tracks:
        raise KeyError(f"target {target!r} not among tracks")
    others = [p for p in tracks if p != target]
    if len(others) < k:
        raise ValueError(f"need {k} neighbors, only {len(others)} other participants")
    tgt = np.asarray(tracks[target], dtype=np.float64)
    dist = {p: float(np.linalg.norm(np.asarray(tracks[p]) - tgt, axis=-1).mean()) for p in others}
    return sorted(others, key=lambda p: (dist[p], p))[:k]


def load_pedestrian_txt(path, n_frames: int = 10, k: int = 4, width: float = 640.0,
                        height: float = 480.0, stride: int | None = None) -> tuple[list[ClipRecord], Manifest]:
    """Window a whitespace ``frame ped x y`` trajectory file into clips.

    In each window the pedestrian with the longest path is the target and its
    ``k`` nearest neighbors are observed; only pedestrians present in every
    frame of the window qualify. World coordinates are mapped affinely onto a
    ``width x height`` frame spanning the file's bounding box.
    """
    raw = np.loadtxt(path, ndmin=2)
    if raw.shape[1] < 4:
        raise ClipFormatError(f"{path}: expected columns frame ped x y")
    frames = np.unique(raw[:, 0])
    lo, hi = raw[:, 2:4].min(axis=0), raw[:, 2:4].max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    px = (raw[:, 2:4] - lo) / span * np.array([width, height])
    lookup = {(f, int(p)): xy for (f, p), xy in zip(raw[:, :2], px)}
    stride = stride or n_frames
    clips = []
    for start in range(0, len(frames) - n_frames + 1, stride):
        window = frames[start:start + n_frames]
        peds = {int(p) for p in raw[np.isin(raw[:, 0], window), 1]}
        tracks = {p: np.array([lookup[(f, p)] for f in window]) for p in sorted(peds)
                  if all((f, p) in lookup for f in window)}
        if len(tracks) < k + 1:
            continue
        lengths = {p: float(np.linalg.norm(np.diff(tr, axis=0), axis=-1).sum()) for p, tr in tracks.items()}
        target = min(tracks, key=lambda p: (-lengths[p], p))
        observed = select_neighbors(tracks, target, k)
        pids = sorted(observed + [target])
        clips.append(ClipRecord(
            clip_id=f"w{start}", participants=[str(p) for p in pids],
            roles=["target" if p == target else "observed" for p in pids],
            positions=np.stack([tracks[p] for p in pids]),
            actions=np.zeros((len(pids), n_frames), dtype=np.int64),
            width=width, height=height))
    return clips, Manifest(width, height, 2.5, ["walk"], k, 1)


# ------------------------------------------------------------------ length bins


BIN_NAMES = ("short", "mid", "long")


@dataclass
class LengthBins:
    short_max: float
    mid_max: float

    def __post_init__(self):
        if not self.short_max < self.mid_max:
            raise ValueError(f"bin boundaries must increase: {self.short_max} !< {self.mid_max}")

    def classify(self, length: float) -> str:
        if length <= self.short_max:
            return "short"
        if length <= self.mid_max:
            return "mid"
        return "long"


def trajectory_length(track, measure: str = "path") -> float:
    """Path length (sum of per-frame steps) or net displacement of a ``[T, 2]`` track."""
    track = np.asarray(track, dtype=np.float64)
    if measure == "path":
        return float(np.linalg.norm(np.diff(track, axis=0), axis=-1).sum())
    if measure == "displacement":
        return float(np.linalg.norm(track[-1] - track[0]))
    raise ValueError(f"unknown length measure {measure!r}")


def compute_bins(lengths, measure: str = "path") -> LengthBins:
    """Boundaries splitting ``lengths`` into three near-equal groups.

    ``lengths`` may be numbers or clips (then every target track counts).
    Each boundary sits midway between the neighbouring sorted values.
    """
    values = []
    for item in lengths:
        if isinstance(item, ClipRecord):
            values.extend(trajectory_length(item.positions[i], measure) for i in item.targets)
        else:
            values.append(float(item))
    if len(values) < 3:
        raise ValueError("need at least 3 trajectories to form length bins")
    s = np.sort(values)
    n = len(s)
    k1, k2 = int(round(n / 3)), int(round(2 * n / 3))
    b1 = 0.5 * (s[k1 - 1] + s[k1])
    b2 = 0.5 * (s[k2 - 1] + s[k2])
    if not b1 < b2:
        raise ValueError("degenerate length distribution; specify bins manually")
    return LengthBins(float(b1), float(b2))


# ------------------------------------------------------------ synthetic data


@dataclass
class SynthSpec:
    kind: str = "pursuit"
    n_obs: int = 3
    n_tgt: int = 1
    n_frames: int = 10
    width: float = 640.0
    height: float = 480.0
    coupling: float = 0.9
    noise: float = 2.0
    seed: int = 0
    n_clips: int = 100

    def __post_init__(self):
        if not 0.0 <= self.coupling <= 1.0:
            raise ValueError("coupling must lie in [0, 1]")
        if self.kind not in ("pursuit", "dance"):
            raise ValueError(f"unknown generator {self.kind!r}")
        if self.n_obs < 1 or self.n_tgt < 1 or self.n_frames < 2:
            raise ValueError("need n_obs >= 1, n_tgt >= 1, n_frames >= 2")


def _octant_action(step: np.ndarray, still: float) -> int:
    """0 for 'stand', else 1..8 by direction (east first, counter-clockwise, image v down)."""
    if np.hypot(*step) < still:
        return 0
    ang = math.atan2(-step[1], step[0])
    return 1 + int(round(ang / (math.pi / 4))) % 8


def _reflect(p: np.ndarray, vel: np.ndarray, w: float, h: float) -> None:
    for d, lim in ((0, w), (1, h)):
        if p[d] < 0:
            p[d], vel[d] = -p[d], abs(vel[d])
        elif p[d] > lim:
            p[d], vel[d] = 2 * lim - p[d], -abs(vel[d])
        p[d] = min(max(p[d], 0.0), lim)


PURSUIT_GAIN = 0.6
PURSUIT_MAX_SPEED = 40.0
LEADER_SPEED = 18.0


def synth_pursuit(spec: SynthSpec) -> list[ClipRecord]:
    """Leaders wander; each target steers toward a designated leader.

    Leaders follow a low-pass filtered random walk reflected at the scene
    border. A target's velocity is ``coupling * pursuit + (1 - coupling) *
    momentum + noise`` where ``pursuit`` points at its leader's current
    position with speed ``min(gain * distance, max_speed)`` and ``momentum``
    is its previous velocity.
    """
    rng = np.random.default_rng(spec.seed)
    T, No, Nt, w, h = spec.n_frames, spec.n_obs, spec.n_tgt, spec.width, spec.height
    c = spec.coupling
    clips = []
    for ci in range(spec.n_clips):
        pos = np.zeros((No + Nt, T, 2))
        lead_p = rng.uniform([0.15 * w, 0.15 * h], [0.85 * w, 0.85 * h], size=(No, 2))
        lead_v = rng.normal(0, LEADER_SPEED, size=(No, 2))
        tgt_p = lead_p[rng.integers(0, No, size=Nt)] + rng.normal(0, 60.0, size=(Nt, 2))
        tgt_p = np.clip(tgt_p, [0, 0], [w, h])
        tgt_v = rng.normal(0, 10.0, size=(Nt, 2))
        assign = np.arange(Nt) % No
        pos[:No, 0], pos[No:, 0] = lead_p, tgt_p
        for t in range(1, T):
            lead_v = 0.7 * lead_v + rng.normal(0, LEADER_SPEED * 0.7, size=(No, 2))
            lead_p = lead_p + lead_v
            for i in range(No):
                _reflect(lead_p[i], lead_v[i], w, h)
            gap = lead_p[assign] - tgt_p
            dist = np.linalg.norm(gap, axis=-1, keepdims=True)
            speed = np.minimum(PURSUIT_GAIN * dist, PURSUIT_MAX_SPEED)
            pursuit = np.where(dist > 0, gap / np.where(dist > 0, dist, 1.0) * speed, 0.0)
            tgt_v = c * pursuit + (1 - c) * tgt_v + rng.normal(0, spec.noise, size=(Nt, 2))
            tgt_p = tgt_p + tgt_v
            for i in range(Nt):
                _reflect(tgt_p[i], tgt_v[i], w, h)
            pos[:No, t], pos[No:, t] = lead_p, tgt_p
        act = np.zeros((No + Nt, T), dtype=np.int64)
        for i in range(No + Nt):
            for t in range(T):
                step = pos[i, t] - pos[i, t - 1] if t > 0 else pos[i, 1] - pos[i, 0]
                act[i, t] = _octant_action(step, still=3.0)
        clips.append(ClipRecord(
            clip_id=f"p{spec.seed}_{ci:05d}",
            participants=[str(i) for i in range(No + Nt)],
            roles=["observed"] * No + ["target"] * Nt,
            positions=pos, actions=act, width=w, height=h))
    return clips


DANCE_PATTERNS = ("circle", "weave")


def synth_dance(spec: SynthSpec) -> list[ClipRecord]:
    """Every dancer follows one phase-offset pattern from a small bank.

    ``circle``: dancers share a ring and rotate together; ``weave``: dancers
    on a line swap sides sinusoidally. A dancer whose angular phase rate is
    high within the frame is labelled 'twirling'; others get a walk label by
    dominant direction or 'stand'. ``coupling`` blends each target's pattern
    position with an independent drift.
    """
    rng = np.random.default_rng(spec.seed)
    T, N, w, h = spec.n_frames, spec.n_obs + spec.n_tgt, spec.width, spec.height
    c = spec.coupling
    clips = []
    for ci in range(spec.n_clips):
        pattern = DANCE_PATTERNS[rng.integers(0, len(DANCE_PATTERNS))]
        center = rng.uniform([0.35 * w, 0.35 * h], [0.65 * w, 0.65 * h])
        radius = rng.uniform(0.12, 0.25) * min(w, h)
        omega = rng.uniform(0.15, 0.45) * rng.choice([-1, 1])
        phase0 = rng.uniform(0, 2 * np.pi)
        offsets = np.arange(N) * 2 * np.pi / N
        t = np.arange(T)[None, :]
        ph = phase0 + offsets[:, None] + omega * t
        if pattern == "circle":
            pos = np.stack([center[0] + radius * np.cos(ph), center[1] + radius * np.sin(ph)], axis=-1)
        else:
            lane = (np.arange(N) - (N - 1) / 2)[:, None] * (1.6 * radius / max(N - 1, 1))
            pos = np.stack([center[0] + lane + 0 * ph, center[1] + radius * np.sin(ph)], axis=-1)
        drift = np.cumsum(rng.normal(0, 6.0, size=(N, T, 2)), axis=1)
        drift[:, 0] = 0
        tgt = slice(spec.n_obs, N)
        pos[tgt] = pos[tgt] + (1 - c) * drift[tgt]
        pos = pos + rng.normal(0, spec.noise, size=pos.shape)
        pos = np.clip(pos, [0, 0], [w, h])
        act = np.zeros((N, T), dtype=np.int64)
        for i in range(N):
            for k in range(T):
                step = pos[i, k] - pos[i, k - 1] if k > 0 else pos[i, 1] - pos[i, 0]
                act[i, k] = _dance_action(step, abs(omega), pattern)
        clips.append(ClipRecord(
            clip_id=f"d{spec.seed}_{ci:05d}", participants=[str(i) for i in range(N)],
            roles=["observed"] * spec.n_obs + ["target"] * spec.n_tgt,
            positions=pos, actions=act, width=w, height=h))
    return clips


def _dance_action(step: np.ndarray, omega: float, pattern: str) -> int:
    if pattern == "circle" and omega > 0.35:
        return 5
    if np.hypot(*step) < 2.0:
        return 0
    if abs(step[0]) >= abs(step[1]):
        return 1 if step[0] < 0 else 2
    return 3 if step[1] < 0 else 4


def synth_manifest(spec: SynthSpec) -> Manifest:
    actions = PURSUIT_ACTIONS if spec.kind == "pursuit" else DANCE_ACTIONS
    return Manifest(spec.width, spec.height, 2.5, list(actions), spec.n_obs, spec.n_tgt)


def generate(spec: SynthSpec) -> tuple[list[ClipRecord], Manifest]:
    gen = synth_pursuit if spec.kind == "pursuit" else synth_dance
    return gen(spec), synth_manifest(spec)
