"""Displacement errors, length-binned reports and macro F1."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import BIN_NAMES, LengthBins, trajectory_length


def _frame_errors(est, gt, first_given: bool) -> np.ndarray:
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape:
        raise ValueError(f"estimate shape {est.shape} != ground truth shape {gt.shape}")
    if est.shape[-1] != 2 or est.ndim < 2:
        raise ValueError("trajectories must be [..., T, 2]")
    err = np.linalg.norm(est - gt, axis=-1)
    if first_given:
        if err.shape[-1] < 2:
            raise ValueError("need at least 2 frames when frame 1 is given")
        err = err[..., 1:]
    return err


def mad(est, gt, first_given: bool = True) -> float:
    """Mean Euclidean error over evaluated frames (2..T by default) and all trajectories."""
    return float(_frame_errors(est, gt, first_given).mean())


def fad(est, gt, first_given: bool = True) -> float:
    """Mean Euclidean error at the last frame."""
    return float(_frame_errors(est, gt, first_given)[..., -1].mean())


def confusion_matrix(pred, gt, n_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground-truth label counts differ")
    if pred.size == 0:
        raise ValueError("no labels to score")
    if min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= n_classes:
        raise ValueError(f"label outside 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (gt, pred), 1)
    return cm


def macro_f1(pred, gt, n_classes: int, absent: str = "zero") -> tuple[float, np.ndarray]:
    """Unweighted mean of per-class F1, and the confusion matrix (rows = ground truth).

    ``absent="zero"`` scores classes that never occur in either input as 0;
    ``absent="skip"`` leaves them out of the mean.
    """
    cm = confusion_matrix(pred, gt, n_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)
    if absent == "skip":
        present = denom > 0
        return float(f1[present].mean()), cm
    if absent != "zero":
        raise ValueError(f"unknown absent-class policy {absent!r}")
    return float(f1.mean()), cm


@dataclass
class MetricsReport:
    mad: float
    fad: float
    bins: dict = field(default_factory=dict)      # name -> {"mad", "fad", "count"}
    macro_f1: float | None = None
    confusion: np.ndarray | None = None

    def rows(self, method: str, task: str, seed) -> list[dict]:
        out = [dict(method=method, task=task, seed=seed, bin="all", metric="MAD", value=self.mad),
               dict(method=method, task=task, seed=seed, bin="all", metric="FAD", value=self.fad)]
        for name in BIN_NAMES:
            b = self.bins.get(name)
            if b is None:
                continue
            for metric in ("MAD", "FAD"):
                out.append(dict(method=method, task=task, seed=seed, bin=name, metric=metric,
                                value=b[metric.lower()]))
            out.append(dict(method=method, task=task, seed=seed, bin=name, metric="count", value=b["count"]))
        if self.macro_f1 is not None:
            out.append(dict(method=method, task=task, seed=seed, bin="all", metric="macroF1",
                            value=self.macro_f1))
        return out


def evaluate_trajectories(est, gt, bins: LengthBins | None = None, measure: str = "path",
                          pred_actions=None, gt_actions=None, n_classes: int | None = None) -> MetricsReport:
    """Metrics for ``[M, T, 2]`` estimate/ground-truth trajectories (one row per target).

    Each trajectory is binned by the length of its ground truth. Action
    labels, when given, are scored over frames 2..T.
    """
    est = np.asarray(est, dtype=np.float64).reshape(-1, *np.shape(est)[-2:])
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, *np.shape(gt)[-2:])
    err = _frame_errors(est, gt, True)
    report = MetricsReport(mad=float(err.mean()), fad=float(err[:, -1].mean()))
    if bins is not None:
        labels = np.array([bins.classify(trajectory_length(g, measure)) for g in gt])
        for name in BIN_NAMES:
            sel = labels == name
            if sel.any():
                report.bins[name] = {"mad": float(err[sel].mean()), "fad": float(err[sel, -1].mean()),
                                     "count": int(sel.sum())}
    if pred_actions is not None:
        pa = np.asarray(pred_actions)[..., 1:]
        ga = np.asarray(gt_actions)[..., 1:]
        report.macro_f1, report.confusion = macro_f1(pa, ga, n_classes)
    return report
