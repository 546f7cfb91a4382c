"""Config-driven experiments: train per (method, seed), roll out, write reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import (ClipBatch, ClipRecord, LengthBins, SynthSpec, compute_bins, generate, load_clips,
                   read_manifest, to_batch)
from .features import OUTPUT_MODES
from .metrics import MetricsReport, evaluate_trajectories
from .model import EFTransformer, ModelConfig
from .plotting import emit_svg
from .rollout import SPIKE_VECTOR, Spike, rollout
from .training import TrainConfig, save_model, train, write_loss_log

log = logging.getLogger(__name__)

CSV_FIELDS = ["method", "mode", "task", "condition", "seed", "bin", "metric", "value"]


@dataclass
class ExperimentConfig:
    """One experiment: data, model/training settings, the methods compared and the seeds.

    ``train_data``/``test_data`` are either a clips CSV path or a dict of
    synthetic-generator settings. Each entry of ``methods`` is
    ``{"name": ..., **ModelConfig overrides}``. ``spikes`` lists frame sets,
    one robustness condition each. ``decode_modes`` re-decodes every rollout
    under extra output modes.
    """

    name: str = "experiment"
    train_data: object = field(default_factory=lambda: {"kind": "pursuit", "n_clips": 2000, "seed": 100})
    test_data: object = field(default_factory=lambda: {"kind": "pursuit", "n_clips": 400, "seed": 200})
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    task: str = "infer"
    k: int = 1
    multi_task: bool = False
    spikes: list = field(default_factory=list)
    spike_vector: tuple = SPIKE_VECTOR
    seeds: list = field(default_factory=lambda: [0])
    methods: list = field(default_factory=lambda: [{"name": "EF", "decoder": "ef"}])
    decode_modes: list = field(default_factory=list)
    length_measure: str = "path"
    save_checkpoints: bool = False
    plots: bool = False

    def validate(self) -> None:
        if self.task not in ("infer", "predict"):
            raise ValueError(f"task must be 'infer' or 'predict', got {self.task!r}")
        if (self.k == 0) != (self.task == "predict"):
            raise ValueError(f"task {self.task!r} is inconsistent with K={self.k}: K=0 means prediction")
        if self.k < 0:
            raise ValueError("K must be >= 0")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if not self.methods:
            raise ValueError("at least one method is required")
        names = [m.get("name") for m in self.methods]
        if None in names or len(set(names)) != len(names):
            raise ValueError("every method needs a unique name")
        for m in self.decode_modes:
            if m not in OUTPUT_MODES:
                raise ValueError(f"unknown output mode {m!r}")
        if len(self.spike_vector) != 6:
            raise ValueError("spike vector must have 6 components")
        TrainConfig.from_dict(self.train)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spike_vector"] = list(self.spike_vector)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.spike_vector = tuple(cfg.spike_vector)
        cfg.spikes = [tuple(s) for s in cfg.spikes]
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ExperimentResult:
    rows: list                          # per-seed and aggregate metric rows, stable order
    reports: dict                       # (method, mode, condition, seed) -> MetricsReport
    loss_logs: dict                     # (method, seed) -> training log rows
    bins: LengthBins

    def value(self, method, metric="FAD", condition="clean", seed="mean", bin="all", mode=None):
        for r in self.rows:
            if (r["method"] == method and r["condition"] == condition and r["seed"] == seed
                    and r["bin"] == bin and r["metric"] == metric and (mode is None or r["mode"] == mode)):
                return r["value"]
        raise KeyError((method, metric, condition, seed, bin, mode))

    def per_seed(self, method, metric="FAD", condition="clean", mode=None, bin="all") -> dict:
        out = {}
        for r in self.rows:
            if (r["method"] == method and r["condition"] == condition and r["bin"] == bin
                    and r["metric"] == metric and r["seed"] not in ("mean", "std")
                    and (mode is None or r["mode"] == mode)):
                out[r["seed"]] = r["value"]
        return out


def load_dataset(source) -> tuple[list[ClipRecord], int]:
    """Clips plus the action-vocabulary size, from a CSV path or generator settings."""
    if isinstance(source, dict):
        clips, manifest = generate(SynthSpec(**source))
        return clips, len(manifest.actions)
    path = Path(source)
    if not path.exists():
        raise FileNotFoundError(f"dataset {path} not found")
    manifest = read_manifest(path.with_suffix(".json"))
    return load_clips(path, manifest), len(manifest.actions)


def condition_name(frames) -> str:
    return "clean" if not frames else "spike@" + "+".join(str(f) for f in frames)


def _model_config(cfg: ExperimentConfig, method: dict, n_obs: int, n_tgt: int, n_actions: int) -> ModelConfig:
    d = dict(cfg.model)
    d.update({k: v for k, v in method.items() if k != "name"})
    d.update(n_obs=n_obs, n_tgt=n_tgt, n_actions=n_actions)
    return ModelConfig.from_dict(d)


def _report(res, batch: ClipBatch, mode: str, bins: LengthBins, measure: str, n_actions: int) -> MetricsReport:
    T = batch.n_frames
    if mode == res.mode:
        est = res.positions
    else:
        est = res.positions_in(mode, batch.tgt_pos[:, :, 0], batch.wh[:, None, :])
    logits = res.action_logits.copy()
    pred = np.zeros(logits.shape[:-1], dtype=np.int64)
    pred[..., 1:] = logits[..., 1:, :].argmax(-1)
    pred[..., 0] = batch.tgt_act[..., 0]
    return evaluate_trajectories(est.reshape(-1, T, 2), batch.tgt_pos.reshape(-1, T, 2), bins, measure,
                                 pred.reshape(-1, T), batch.tgt_act.reshape(-1, T), n_actions)


def _run_job(args) -> dict:
    cfg, method, seed, train_set, test_set, n_actions, bins, out = args
    mcfg = _model_config(cfg, method, train_set.obs_pos.shape[1], train_set.tgt_pos.shape[1], n_actions)
    tcfg = TrainConfig.from_dict({**cfg.train, "seed": seed, "foresight": cfg.k})
    model = EFTransformer(mcfg, seed=seed)
    log.info("training %s seed %d", method["name"], seed)
    result = train(train_set, model, tcfg)
    modes = [mcfg.output_mode] + [m for m in cfg.decode_modes if m != mcfg.output_mode]
    reports, clean = {}, None
    for frames in [()] + list(cfg.spikes):
        spike = Spike(frames, cfg.spike_vector) if frames else None
        res = rollout(model, test_set, cfg.k, multi_task=cfg.multi_task, spike=spike)
        if not frames:
            clean = res
        for mode in modes:
            reports[(mode, condition_name(frames))] = _report(res, test_set, mode, bins, cfg.length_measure,
                                                              n_actions)
    if out is not None:
        run_dir = Path(out) / f"{method['name']}_seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        write_loss_log(run_dir / "loss.csv", result.log_rows)
        if cfg.save_checkpoints:
            save_model(run_dir / "model.efck", model)
    return {"reports": reports, "log": result.log_rows, "clip0": clean.positions[0]}


def _threads() -> int:
    raw = os.environ.get("EFFORMER_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"EFFORMER_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def run_experiment(cfg: ExperimentConfig, out=None) -> ExperimentResult:
    """Train every (method, seed), evaluate free-running rollouts, write the metrics CSV."""
    cfg.validate()
    train_clips, n_actions = load_dataset(cfg.train_data)
    test_clips, n_test_actions = load_dataset(cfg.test_data)
    if n_actions != n_test_actions:
        raise ValueError("train and test data use different action vocabularies")
    if not train_clips or not test_clips:
        raise ValueError("empty train or test data")
    train_set, test_set = to_batch(train_clips), to_batch(test_clips)
    if train_set.n_frames != test_set.n_frames:
        raise ValueError("train and test clips differ in length")
    if cfg.k > test_set.n_frames - 1:
        raise ValueError(f"K={cfg.k} exceeds T-1={test_set.n_frames - 1}")
    for frames in cfg.spikes:
        bad = [f for f in frames if not 2 <= f <= test_set.n_frames - 1]
        if bad:
            raise ValueError(f"spike frames {bad} outside 2..{test_set.n_frames - 1}")
    bins = compute_bins(train_clips, cfg.length_measure)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")

    jobs = [(cfg, m, s, train_set, test_set, n_actions, bins, out) for m in cfg.methods for s in cfg.seeds]
    n_workers = min(_threads(), len(jobs))
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            outputs = list(pool.map(_run_job, jobs))
    else:
        outputs = [_run_job(j) for j in jobs]

    reports, loss_logs, rows = {}, {}, []
    for (_, method, seed, *_), o in zip(jobs, outputs):
        loss_logs[(method["name"], seed)] = o["log"]
        for (mode, cond), rep in o["reports"].items():
            reports[(method["name"], mode, cond, seed)] = rep
            rows.extend(dict(r, mode=mode, condition=cond) for r in rep.rows(method["name"], cfg.task, seed))
    rows.extend(_aggregate(rows))
    if out is not None:
        write_metrics_csv(Path(out) / "metrics.csv", rows)
        if cfg.plots:
            _plots(cfg, jobs, outputs, test_set, Path(out))
    return ExperimentResult(rows, reports, loss_logs, bins)


def _aggregate(rows: list) -> list:
    groups: dict = {}
    for r in rows:
        key = (r["method"], r["mode"], r["task"], r["condition"], r["bin"], r["metric"])
        groups.setdefault(key, []).append(float(r["value"]))
    out = []
    for key, vals in groups.items():
        method, mode, task, cond, b, metric = key
        base = dict(method=method, mode=mode, task=task, condition=cond, bin=b, metric=metric)
        out.append(dict(base, seed="mean", value=float(np.mean(vals))))
        out.append(dict(base, seed="std", value=float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0))
    return out


def metrics_csv_text(rows: list) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        v = r["value"]
        w.writerow({**{k: r[k] for k in CSV_FIELDS if k != "value"},
                    "value": repr(float(v)) if not isinstance(v, (int, np.integer)) else str(int(v))})
    return buf.getvalue()


def write_metrics_csv(path, rows: list) -> None:
    Path(path).write_text(metrics_csv_text(rows), encoding="utf-8")


def read_metrics_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _plots(cfg, jobs, outputs, test_set: ClipBatch, out: Path) -> None:
    plot_dir = out / "plots"
    plot_dir.mkdir(exist_ok=True)
    first_seed = cfg.seeds[0]
    estimates = {job[1]["name"]: o["clip0"] for job, o in zip(jobs, outputs) if job[2] == first_seed}
    w, h = test_set.wh[0]
    emit_svg(plot_dir / "clip0.svg", test_set.obs_pos[0], test_set.tgt_pos[0], estimates, float(w), float(h),
             title=f"{test_set.clip_ids[0]} (seed {first_seed})")


def variance_report(result: ExperimentResult, methods, modes, metric: str = "FAD") -> str:
    """Plain-text table of per-seed values with mean and variance per (method, mode)."""
    lines = [f"{'method':<14}{'mode':<10}{'mean':>10}{'variance':>12}  per-seed"]
    for method in methods:
        for mode in modes:
            vals = result.per_seed(method, metric, mode=mode)
            if not vals:
                continue
            v = np.array(list(vals.values()))
            var = float(np.var(v, ddof=1)) if len(v) > 1 else 0.0
            seeds = " ".join(f"{x:.2f}" for x in v)
            lines.append(f"{method:<14}{mode:<10}{v.mean():>10.3f}{var:>12.3f}  {seeds}")
    return "\n".join(lines) + "\n"
