"""Loss, Adam and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import ClipBatch
from .features import time_column
from .model import EFTransformer, ModelConfig
from .nn import read_checkpoint, save_checkpoint
from .rollout import rollout
from .tensor import Tensor, l2_norm, mul, sub, tsum

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lambda_action: float = 0.1
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    teacher_forcing: bool = True
    loss_kind: str = "l2"     # "l2": unsquared norms as printed; "mse": squared, for experiments
    foresight: int = 1

    def __post_init__(self):
        if self.lambda_action < 0:
            raise ValueError("lambda_action must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.loss_kind not in ("l2", "mse"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def loss(pred_geo: Tensor, pred_act: Tensor, gt_geo, gt_onehot, lam: float = 0.1,
         kind: str = "l2") -> Tensor:
    """Sum over targets and frames of ``|g - g_hat| + lam * |s - s_hat|``.

    ``pred_geo``/``gt_geo`` are ``[..., 6]`` (the geometric feature without
    t/T); ``pred_act`` holds raw head outputs compared against one-hot labels.
    """
    gt_geo = np.asarray(gt_geo)
    gt_onehot = np.asarray(gt_onehot)
    if pred_geo.shape != gt_geo.shape or pred_act.shape != gt_onehot.shape:
        raise ValueError(f"prediction/ground-truth shape mismatch: {pred_geo.shape} vs {gt_geo.shape}, "
                         f"{pred_act.shape} vs {gt_onehot.shape}")
    dg = sub(pred_geo, Tensor(gt_geo.astype(pred_geo.dtype)))
    da = sub(pred_act, Tensor(gt_onehot.astype(pred_act.dtype)))
    if kind == "mse":
        geo_term, act_term = tsum(mul(dg, dg)), tsum(mul(da, da))
    else:
        geo_term, act_term = tsum(l2_norm(dg)), tsum(l2_norm(da))
    if lam == 0:
        return geo_term
    return geo_term + act_term * lam


class Adam:
    """Adam with bias correction; one state slot per parameter, in order."""

    def __init__(self, params: list[Tensor], lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(params, grads, state: Adam) -> None:
    """Functional form: assign ``grads`` and apply one update from ``state``."""
    for p, g in zip(params, grads):
        p.grad = None if g is None else np.asarray(g)
    state.step()


def batch_loss(model: EFTransformer, batch: ClipBatch, K: int, lam: float, kind: str = "l2",
               history_geo: np.ndarray | None = None) -> Tensor:
    """Loss per clip (summed loss divided by batch size) under the teacher-forced pass.

    ``history_geo`` (``[B, Nt, T, 7]``) overrides the ground-truth target
    history, for training on the model's own estimates.
    """
    C = model.cfg.n_actions
    obs_oh, tgt_oh = batch.onehots(C)
    tgt_geo = batch.tgt_geo()
    hist = tgt_geo if history_geo is None else history_geo
    g, a = model.forward(batch.obs_geo(), obs_oh, hist, tgt_oh, K)
    total = loss(g, a, tgt_geo[:, :, 1:, :6], tgt_oh[:, :, 1:], lam, kind)
    return total * (1.0 / len(batch))


@dataclass
class TrainResult:
    model: EFTransformer
    losses: list = field(default_factory=list)
    log_rows: list = field(default_factory=list)


class NonFiniteLoss(FloatingPointError):
    pass


def _free_running_history(model: EFTransformer, batch: ClipBatch, K: int) -> np.ndarray:
    res = rollout(model, batch, K)
    B, Nt, T, _ = res.geometry.shape
    return np.concatenate([res.geometry, time_column(T, T, (B, Nt))], axis=-1)


def train(train_set: ClipBatch, model: EFTransformer, cfg: TrainConfig, val_set: ClipBatch | None = None,
          log_path=None, checkpoint_dir=None, checkpoint_every: int = 0, evaluate=None) -> TrainResult:
    """Minimize the batch loss with Adam for ``cfg.epochs`` passes.

    ``evaluate(model, batch) -> (mad, fad)`` is called on ``val_set`` after each
    epoch when both are given; rows go to ``log_path`` as CSV.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    result = TrainResult(model)
    n = len(train_set)
    K = cfg.foresight
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = train_set.subset(idx)
            hist = None if cfg.teacher_forcing else _free_running_history(model, batch, K)
            opt.zero_grad()
            L = batch_loss(model, batch, K, cfg.lambda_action, cfg.loss_kind, hist)
            value = float(L.data)
            if not math.isfinite(value):
                raise NonFiniteLoss(f"non-finite loss {value} at epoch {epoch}, batch starting {start}")
            L.backward()
            opt.step()
            total += value * len(idx)
            count += len(idx)
        mean_loss = total / count
        result.losses.append(mean_loss)
        row = {"epoch": epoch, "split": "train", "loss": mean_loss, "MAD": "", "FAD": ""}
        result.log_rows.append(row)
        if val_set is not None and evaluate is not None:
            mad, fad = evaluate(model, val_set)
            result.log_rows.append({"epoch": epoch, "split": "val", "loss": "", "MAD": mad, "FAD": fad})
        log.info("epoch %d loss %.5f", epoch, mean_loss)
        if checkpoint_dir is not None and checkpoint_every and epoch % checkpoint_every == 0:
            save_model(Path(checkpoint_dir) / f"epoch{epoch:04d}.efck", model)
    if log_path is not None:
        write_loss_log(log_path, result.log_rows)
    return result


def write_loss_log(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "split", "loss", "MAD", "FAD"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def save_model(path, model: EFTransformer) -> None:
    """Checkpoint plus a ``.json`` sidecar with the model config."""
    path = Path(path)
    cfg = model.cfg
    save_checkpoint(path, model, {"config_hash": cfg.config_hash()})
    path.with_suffix(".json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def load_model(path) -> EFTransformer:
    path = Path(path)
    cfg = ModelConfig.from_dict(json.loads(path.with_suffix(".json").read_text()))
    meta, state = read_checkpoint(path)
    if meta.get("config_hash") != cfg.config_hash():
        raise ValueError(f"{path}: checkpoint config hash does not match its sidecar config")
    model = EFTransformer(cfg)
    model.load_state_dict(state)
    return model


__all__ = ["TrainConfig", "loss", "Adam", "adam_step", "batch_loss", "train", "TrainResult",
           "NonFiniteLoss", "save_model", "load_model", "write_loss_log"]
