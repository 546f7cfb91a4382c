"""Parameterized layers: linear maps, layer norm, FFN and multi-head attention.

Also holds the checkpoint container used to persist parameters. Layout of a
checkpoint file::

    bytes 0..3   magic  b"EFCK"
    bytes 4..7   uint32 little-endian header length H
    bytes 8..8+H UTF-8 JSON header:
                 {"version": 1,
                  "meta": {...},                      # free-form, e.g. config hash
                  "tensors": [{"name", "shape", "offset", "count"}, ...]}
    rest         concatenated float32 little-endian payloads; ``offset`` and
                 ``count`` are in scalars from the start of the payload

Tensors appear in the module's registration order.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import Tensor, layer_norm, leaky_relu, masked_fill, matmul, scale, softmax, transpose

CHECKPOINT_MAGIC = b"EFCK"
CHECKPOINT_VERSION = 1


class Module:
    """Minimal parameter container; submodules and parameters register by attribute."""

    def __setattr__(self, name, value):
        if isinstance(value, (Module, Tensor)):
            self.__dict__.setdefault("_order", []).append(name)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name in self.__dict__.get("_order", []):
            value = self.__dict__[name]
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, modules):
        for i, m in enumerate(modules):
            setattr(self, str(i), m)

    def __iter__(self):
        return (self.__dict__[n] for n in self.__dict__.get("_order", []))

    def __len__(self):
        return len(self.__dict__.get("_order", []))

    def __getitem__(self, i):
        return self.__dict__[self.__dict__["_order"][i]]


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype)


class Linear(Module):
    """Affine map ``x @ weight + bias`` on the last axis."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float64):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Tensor(glorot(rng, in_dim, out_dim, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float64):
        if eps <= 0:
            raise ValueError("layer norm epsilon must be positive")
        self.eps = eps
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.offset = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.offset, self.eps)


class FFN(Module):
    """Two affine maps with a LeakyReLU in between."""

    def __init__(self, dim: int, hidden: int, rng, dtype=np.float64, slope: float = 0.01):
        self.slope = slope
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(leaky_relu(self.fc1(x), self.slope))


class ScoreCounter:
    """Collects the per-sample, per-head number of attention score entries."""

    def __init__(self):
        self.counts: list[int] = []

    @property
    def total(self) -> int:
        return sum(self.counts)


_counter_stack: list[ScoreCounter] = []


class count_scores:
    """Context manager: record score-matrix sizes of every attention call."""

    def __enter__(self) -> ScoreCounter:
        c = ScoreCounter()
        _counter_stack.append(c)
        return c

    def __exit__(self, *exc):
        _counter_stack.pop()
        return False


class MultiHeadAttention(Module):
    """Scaled dot-product attention with H heads, output map and query residual.

    ``f_q, f_k, f_v`` project D to ``heads * head_dim`` (one head_dim slice per
    head); ``f_o`` maps the concatenated heads back to D so the residual with
    the query input is well-typed.
    """

    def __init__(self, dim: int, heads: int, head_dim: int, rng, dtype=np.float64):
        if heads < 1:
            raise ValueError("need at least one head")
        self.dim, self.heads, self.head_dim = dim, heads, head_dim
        inner = heads * head_dim
        self.f_q = Linear(dim, inner, rng, dtype)
        self.f_k = Linear(dim, inner, rng, dtype)
        self.f_v = Linear(dim, inner, rng, dtype)
        self.f_o = Linear(inner, dim, rng, dtype)

    def _split(self, x: Tensor) -> Tensor:
        # [..., n, H*dh] -> [..., H, n, dh]
        lead = x.shape[:-2]
        n = x.shape[-2]
        x = x.reshape(lead + (n, self.heads, self.head_dim))
        nd = x.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return transpose(x, axes)

    def weights(self, xq: Tensor, xk: Tensor, mask=None) -> Tensor:
        """Post-softmax attention weights, shape ``[..., H, nq, nk]``."""
        q = self._split(self.f_q(xq))
        k = self._split(self.f_k(xk))
        scores = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
        scores = scale(scores, 1.0 / math.sqrt(self.head_dim))
        if _counter_stack:
            lead = scores.shape[:-3]
            per_sample = int(np.prod(lead[1:])) if len(lead) > 1 else 1
            _counter_stack[-1].counts.append(per_sample * scores.shape[-2] * scores.shape[-1])
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            # rows with every key forbidden have no defined softmax
            if mask.all(axis=-1).any():
                raise ValueError("attention mask disables every key for some query row")
            # insert the head axis
            mask = np.expand_dims(mask, -3)
            scores = masked_fill(scores, mask)
        return softmax(scores)

    def __call__(self, xq: Tensor, xk: Tensor, xv: Tensor, mask=None, trace: dict | None = None) -> Tensor:
        if xk.shape[-2] != xv.shape[-2]:
            raise ValueError(f"key/value row counts differ: {xk.shape} vs {xv.shape}")
        if xq.shape[-1] != self.dim or xk.shape[-1] != self.dim or xv.shape[-1] != self.dim:
            raise ValueError("feature dimension does not match the attention layer")
        w = self.weights(xq, xk, mask)
        v = self._split(self.f_v(xv))
        heads = matmul(w, v)  # [..., H, nq, dh]
        nd = heads.ndim
        merged = transpose(heads, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
        merged = merged.reshape(merged.shape[:-2] + (self.heads * self.head_dim,))
        if trace is not None:
            trace["query"] = xq
            trace["weights"] = w
        return self.f_o(merged) + xq


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(path, module: Module, meta: dict | None = None) -> None:
    entries, payload, offset = [], [], 0
    for name, p in module.named_parameters():
        arr = np.ascontiguousarray(p.data, dtype="<f4").reshape(-1)
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "count": int(arr.size)})
        payload.append(arr.tobytes())
        offset += arr.size
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "meta": meta or {}, "tensors": entries}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for chunk in payload:
            fh.write(chunk)


def read_checkpoint(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    """Return ``(meta, state)`` from a checkpoint file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    data = np.frombuffer(blob[8 + hlen :], dtype="<f4")
    state = OrderedDict()
    for e in header["tensors"]:
        chunk = data[e["offset"] : e["offset"] + e["count"]]
        if chunk.size != e["count"]:
            raise ValueError(f"{path}: truncated payload for {e['name']}")
        state[e["name"]] = chunk.reshape(e["shape"]).astype(np.float64)
    return header["meta"], state


__all__ = [
    "Module",
    "ModuleList",
    "Linear",
    "LayerNorm",
    "FFN",
    "MultiHeadAttention",
    "ScoreCounter",
    "count_scores",
    "glorot",
    "save_checkpoint",
    "read_checkpoint",
]
