"""The entry-flipped spatio-temporal transformer.

Feature tensors are laid out ``[B, R, F, D]``: batch, rows (participants),
frames, channels.

Encoder. Observed participants go through ``L`` encoder layers. Each layer
has a self-attention block (spatial, temporal, or joint, per
``ModelConfig.encoder``) followed by an FFN, with post-norm. The temporal
mask of the first layer lets frame ``f`` see frames ``<= f + K``; deeper
layers are causal. The encoded frame ``f`` therefore depends on observed
frames ``<= min(f + K, T)`` and on nothing later, whatever ``L`` is.

Decoder. The decoder consumes a stream indexed by position ``p = 0..P-1``;
position ``p`` carries what is known when estimating frame ``p + 1`` (0-based),
i.e. target history up to frame ``p``. Every decoder layer self-attends over
the stream (causal in time) and then cross-attends:

* ``typical``: query = stream at ``p``; key/value = encoded frames ``<= p``.
* ``ef``: query = encoded observed rows at frame ``p``; key/value = stream
  positions ``<= p``.
* ``allq``: query = encoded observed rows at every frame ``<= p``;
  key/value as in ``ef``; the per-frame outputs are averaged.

``hyb-te`` and ``hyb-et`` stack one typical and one ``ef`` layer. EF layers
always take the final encoder output as query; their key/value stream is
the previous decoder layer's output.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .features import OUTPUT_MODES, positional_encoding
from .nn import FFN, LayerNorm, Linear, Module, ModuleList, MultiHeadAttention
from .tensor import Tensor, concat, leaky_relu, matmul, transpose

ENCODER_VARIANTS = ("par", "st", "ts", "joint")
DECODER_VARIANTS = ("typical", "ef", "allq", "hyb-te", "hyb-et")

_DECODER_LAYERS = {
    "typical": lambda L: ["typical"] * L,
    "ef": lambda L: ["ef"] * L,
    "allq": lambda L: ["allq"] * L,
    "hyb-te": lambda L: ["typical", "ef"],
    "hyb-et": lambda L: ["ef", "typical"],
}


@dataclass
class ModelConfig:
    n_obs: int
    n_tgt: int
    n_actions: int
    layers: int = 2
    heads: int = 8
    geom_dim: int = 64
    action_dim: int = 64
    head_dim: int = 8
    ffn_dim: int = 256
    pred_hidden: int = 256
    encoder: str = "st"
    decoder: str = "ef"
    output_mode: str = "uvr"
    slope: float = 0.01
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    @property
    def model_dim(self) -> int:
        return self.geom_dim + self.action_dim

    def validate(self) -> None:
        if self.n_obs < 1 or self.n_tgt < 1:
            raise ValueError("need at least one observed and one target participant")
        if self.n_actions < 1:
            raise ValueError("need at least one action class")
        if self.layers < 1 or self.heads < 1 or self.head_dim < 1:
            raise ValueError("layers, heads and head_dim must be positive")
        if self.encoder not in ENCODER_VARIANTS:
            raise ValueError(f"unknown encoder variant {self.encoder!r}; expected {ENCODER_VARIANTS}")
        if self.decoder not in DECODER_VARIANTS:
            raise ValueError(f"unknown decoder variant {self.decoder!r}; expected {DECODER_VARIANTS}")
        if self.decoder.startswith("hyb") and self.layers != 2:
            raise ValueError("hybrid decoders need exactly 2 layers")
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"unknown output mode {self.output_mode!r}; expected {OUTPUT_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def decoder_layers(self) -> list[str]:
        return _DECODER_LAYERS[self.decoder](self.layers)

    @property
    def decoder_rows(self) -> int:
        """Row count of the last decoder layer's output."""
        rows = self.n_tgt
        for kind in self.decoder_layers:
            if kind in ("ef", "allq"):
                rows = self.n_obs
        return rows

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


# ------------------------------------------------------------------ attention


def temporal_mask(n_frames: int, horizon: int) -> np.ndarray:
    """True where key frame ``k`` lies beyond ``min(q + horizon, F - 1)``."""
    q = np.arange(n_frames)[:, None]
    k = np.arange(n_frames)[None, :]
    return k > np.minimum(q + horizon, n_frames - 1)


def spatial_self_attention(att: MultiHeadAttention, x: Tensor) -> Tensor:
    """Attention among the rows of each frame independently."""
    xt = transpose(x, (0, 2, 1, 3))
    return transpose(att(xt, xt, xt), (0, 2, 1, 3))


def temporal_self_attention(att: MultiHeadAttention, x: Tensor, horizon: int) -> Tensor:
    """Attention along frames of each row; query frame q sees key frames <= q + horizon."""
    return att(x, x, x, temporal_mask(x.shape[2], horizon))


def joint_self_attention(att: MultiHeadAttention, x: Tensor, horizon: int) -> Tensor:
    """Attention over all R*F tokens; the temporal horizon applies to every pair."""
    B, R, F, D = x.shape
    flat = x.reshape(B, R * F, D)
    mask = np.tile(temporal_mask(F, horizon), (R, R))
    return att(flat, flat, flat, mask).reshape(B, R, F, D)


class SelfAttentionBlock(Module):
    def __init__(self, variant: str, cfg: ModelConfig, rng, dtype):
        self.variant = variant
        D = cfg.model_dim
        if variant == "joint":
            self.att_j = MultiHeadAttention(D, cfg.heads, cfg.head_dim, rng, dtype)
            self.ln_j = LayerNorm(D, dtype=dtype)
        else:
            self.att_s = MultiHeadAttention(D, cfg.heads, cfg.head_dim, rng, dtype)
            self.att_t = MultiHeadAttention(D, cfg.heads, cfg.head_dim, rng, dtype)
            self.ln_s = LayerNorm(D, dtype=dtype)
            self.ln_t = LayerNorm(D, dtype=dtype)

    def __call__(self, x: Tensor, horizon: int) -> Tensor:
        v = self.variant
        if v == "joint":
            return self.ln_j(joint_self_attention(self.att_j, x, horizon))
        if v == "par":
            return self.ln_s(spatial_self_attention(self.att_s, x)) + self.ln_t(
                temporal_self_attention(self.att_t, x, horizon))
        if v == "st":
            h = self.ln_s(spatial_self_attention(self.att_s, x))
            return self.ln_t(temporal_self_attention(self.att_t, h, horizon))
        h = self.ln_t(temporal_self_attention(self.att_t, x, horizon))
        return self.ln_s(spatial_self_attention(self.att_s, h))


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        D = cfg.model_dim
        self.block = SelfAttentionBlock(cfg.encoder, cfg, rng, dtype)
        self.ffn = FFN(D, cfg.ffn_dim, rng, dtype, cfg.slope)
        self.ln_f = LayerNorm(D, dtype=dtype)

    def __call__(self, x: Tensor, horizon: int) -> Tensor:
        h = self.block(x, horizon)
        return self.ln_f(self.ffn(h) + h)


def _allq_pool(P: int, rows: int, dtype) -> np.ndarray:
    """Averaging weights ``[P, rows, P*rows]`` over query frames ``<= p``."""
    W = np.zeros((P, rows, P * rows), dtype=dtype)
    for p in range(P):
        for f in range(p + 1):
            W[p, np.arange(rows), f * rows + np.arange(rows)] = 1.0 / (p + 1)
    return W


class DecoderLayer(Module):
    def __init__(self, kind: str, cfg: ModelConfig, rng, dtype):
        D = cfg.model_dim
        self.kind = kind
        self.block = SelfAttentionBlock(cfg.encoder, cfg, rng, dtype)
        self.cross = MultiHeadAttention(D, cfg.heads, cfg.head_dim, rng, dtype)
        self.ln_c = LayerNorm(D, dtype=dtype)
        self.ffn = FFN(D, cfg.ffn_dim, rng, dtype, cfg.slope)
        self.ln_f = LayerNorm(D, dtype=dtype)

    def __call__(self, stream: Tensor, xenc: Tensor, trace: dict | None = None) -> Tensor:
        s = self.block(stream, 0)
        B, R, P, D = s.shape
        No, T = xenc.shape[1], xenc.shape[2]
        if P > T:
            raise ValueError(f"stream has {P} positions but only {T} encoded frames")
        if self.kind == "typical":
            q = transpose(s, (0, 2, 1, 3))  # [B, P, R, D]
            kv = transpose(xenc, (0, 2, 1, 3)).reshape(B, 1, T * No, D)
            key_frame = np.repeat(np.arange(T), No)
            mask = (key_frame[None, :] > np.arange(P)[:, None])[:, None, :]
            out = self.cross(q, kv, kv, mask, trace)
        elif self.kind == "ef":
            q = transpose(xenc[:, :, :P], (0, 2, 1, 3))  # [B, P, No, D]
            kv = transpose(s, (0, 2, 1, 3)).reshape(B, 1, P * R, D)
            key_pos = np.repeat(np.arange(P), R)
            mask = (key_pos[None, :] > np.arange(P)[:, None])[:, None, :]
            out = self.cross(q, kv, kv, mask, trace)
        elif self.kind == "allq":
            q = transpose(xenc[:, :, :P], (0, 2, 1, 3)).reshape(B, 1, P * No, D)
            # one copy of the query set per stream position, each with its own mask
            q = q + Tensor(np.zeros((1, P, 1, 1), dtype=q.dtype))
            kv = transpose(s, (0, 2, 1, 3)).reshape(B, 1, P * R, D)
            key_pos = np.repeat(np.arange(P), R)
            mask = np.broadcast_to((key_pos[None, :] > np.arange(P)[:, None])[:, None, :],
                                   (P, P * No, P * R))
            full = self.cross(q, kv, kv, mask, trace)  # [B, P, P*No, D]
            out = matmul(Tensor(_allq_pool(P, No, full.dtype)), full)
        else:
            raise ValueError(f"unknown decoder layer kind {self.kind!r}")
        h = self.ln_c(transpose(out, (0, 2, 1, 3)))
        return self.ln_f(self.ffn(h) + h)


class PredictionHead(Module):
    """Flatten rows, then three affine layers with LeakyReLU after the first two."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng, dtype, slope: float):
        self.slope = slope
        self.fc1 = Linear(in_dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, hidden, rng, dtype)
        self.fc3 = Linear(hidden, out_dim, rng, dtype)

    def __call__(self, dec: Tensor) -> Tensor:
        B, R, P, D = dec.shape
        x = transpose(dec, (0, 2, 1, 3)).reshape(B, P, R * D)
        x = leaky_relu(self.fc1(x), self.slope)
        x = leaky_relu(self.fc2(x), self.slope)
        return self.fc3(x)


class EFTransformer(Module):
    """Embedding, encoder stack, decoder stack and trajectory/action heads."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        self.np_dtype = dtype
        rng = np.random.default_rng(seed)
        D = cfg.model_dim
        self.f_g = Linear(7, cfg.geom_dim, rng, dtype)
        self.f_s = Linear(cfg.n_actions, cfg.action_dim, rng, dtype)
        self.encoder_layers = ModuleList([EncoderLayer(cfg, rng, dtype) for _ in range(cfg.layers)])
        self.decoder_layers = ModuleList([DecoderLayer(k, cfg, rng, dtype) for k in cfg.decoder_layers])
        rows = cfg.decoder_rows
        self.traj_head = PredictionHead(rows * D, cfg.pred_hidden, 6 * cfg.n_tgt, rng, dtype, cfg.slope)
        self.action_head = PredictionHead(rows * D, cfg.pred_hidden, cfg.n_actions * cfg.n_tgt, rng,
                                          dtype, cfg.slope)

    # ---------------------------------------------------------------- pieces
    def embed(self, geo7: np.ndarray, onehot: np.ndarray) -> Tensor:
        """Features ``[B, R, F, D]`` from geometry ``[B, R, F, 7]`` and one-hot actions."""
        dt = self.np_dtype
        g = self.f_g(Tensor(np.asarray(geo7, dtype=dt)))
        s = self.f_s(Tensor(np.asarray(onehot, dtype=dt)))
        pe = positional_encoding(geo7.shape[-2], self.cfg.model_dim).astype(dt)
        return concat([g, s], axis=-1) + Tensor(pe)

    def st_encode(self, x: Tensor, K: int) -> Tensor:
        for i, layer in enumerate(self.encoder_layers):
            x = layer(x, K if i == 0 else 0)
        return x

    def decode(self, stream: Tensor, xenc: Tensor, trace: list | None = None) -> Tensor:
        for layer in self.decoder_layers:
            rec = {} if trace is not None else None
            stream = layer(stream, xenc, rec)
            if trace is not None:
                rec["kind"] = layer.kind
                trace.append(rec)
        return stream

    def predict_head(self, dec: Tensor) -> tuple[Tensor, Tensor]:
        """Per-target 6-D geometry ``[B, Nt, P, 6]`` and action logits ``[B, Nt, P, C]``."""
        B, _, P, _ = dec.shape
        Nt, C = self.cfg.n_tgt, self.cfg.n_actions
        geo = self.traj_head(dec).reshape(B, P, Nt, 6)
        act = self.action_head(dec).reshape(B, P, Nt, C)
        return transpose(geo, (0, 2, 1, 3)), transpose(act, (0, 2, 1, 3))

    def decode_step(self, xenc: Tensor, history: Tensor, trace: list | None = None) -> Tensor:
        """Decoded feature for the frame after the last history frame.

        ``history`` holds embedded target features for frames ``1..tau-1``;
        the result is ``[B, rows, D]`` for estimating frame ``tau``.
        """
        if history.shape[2] < 1:
            raise ValueError("decoding needs at least the first target frame")
        dec = self.decode(history, xenc, trace)
        return dec[:, :, -1]

    # --------------------------------------------------------------- forward
    def forward(self, obs_geo, obs_onehot, tgt_geo, tgt_onehot, K: int) -> tuple[Tensor, Tensor]:
        """Teacher-forced pass: target history for frames 1..T-1 predicts frames 2..T."""
        T = obs_geo.shape[2]
        xenc = self.st_encode(self.embed(obs_geo, obs_onehot), K)
        stream = self.embed(tgt_geo[:, :, : T - 1], tgt_onehot[:, :, : T - 1])
        return self.predict_head(self.decode(stream, xenc))
