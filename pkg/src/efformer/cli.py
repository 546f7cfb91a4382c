"""Command line: generate | train | eval | rollout | robustness | ablate.

Every command reads one JSON config file; flags override its fields.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .data import ClipFormatError, SynthSpec, compute_bins, generate, to_batch, write_clips
from .experiments import (ExperimentConfig, _model_config, _report, condition_name, load_dataset,
                          run_experiment, variance_report, write_metrics_csv)
from .features import OUTPUT_MODES
from .model import DECODER_VARIANTS, ENCODER_VARIANTS, EFTransformer
from .plotting import emit_svg
from .rollout import SPIKE_VECTOR, Spike, rollout
from .training import TrainConfig, load_model, save_model, train

log = logging.getLogger("efformer")

DEFAULT_SPIKES = [(3,), (6,), (9,), (2, 3), (5, 6), (8, 9)]


def parse_spike(text: str) -> tuple[tuple, tuple]:
    """``"frames=5,6 vec=1,1,-1,-1,-1,-1"`` -> (frames, vector); ``vec`` is optional."""
    frames, vec = None, SPIKE_VECTOR
    for part in text.split():
        key, sep, val = part.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected key=value in spike spec, got {part!r}")
        try:
            nums = [float(x) for x in val.split(",") if x]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad number in spike spec {part!r}") from None
        if key == "frames":
            if any(n != int(n) for n in nums):
                raise argparse.ArgumentTypeError("spike frames must be integers")
            frames = tuple(int(n) for n in nums)
        elif key == "vec":
            if len(nums) != 6:
                raise argparse.ArgumentTypeError("spike vec needs 6 components")
            vec = tuple(nums)
        else:
            raise argparse.ArgumentTypeError(f"unknown spike key {key!r}")
    if not frames:
        raise argparse.ArgumentTypeError("spike spec needs frames=...")
    return frames, vec


def _read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config {p} not found")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{p}: invalid JSON ({exc})") from None


def experiment_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_dict(_read_config(args.config))
    overrides = {k: getattr(args, k) for k in ("decoder", "encoder") if getattr(args, k, None)}
    if getattr(args, "mode", None):
        overrides["output_mode"] = args.mode
    if overrides:
        cfg.methods = [dict(m, **overrides) for m in cfg.methods]
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    task, k = getattr(args, "task", None), getattr(args, "k", None)
    if task is not None:
        cfg.task = task
        if k is None:
            cfg.k = 0 if task == "predict" else max(cfg.k, 1)
    if k is not None:
        cfg.k = k
        if task is None:
            cfg.task = "predict" if k == 0 else "infer"
    if getattr(args, "spike", None):
        cfg.spikes = [f for f, _ in args.spike]
        cfg.spike_vector = args.spike[0][1]
    cfg.validate()
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ commands


def cmd_generate(args) -> int:
    raw = _read_config(args.config)
    splits = raw if raw and all(isinstance(v, dict) for v in raw.values()) else {"clips": raw}
    out = _out(args)
    for name, spec_d in splits.items():
        spec = SynthSpec(**spec_d)
        if args.seed is not None:
            spec.seed = args.seed
        clips, manifest = generate(spec)
        write_clips(out / f"{name}.csv", clips, manifest)
        (out / f"{name}.spec.json").write_text(json.dumps(asdict(spec), indent=2) + "\n")
        print(f"wrote {len(clips)} clips to {out / f'{name}.csv'}")
    return 0


def cmd_train(args) -> int:
    cfg = experiment_config(args)
    out = _out(args)
    clips, n_actions = load_dataset(cfg.train_data)
    train_set = to_batch(clips)
    method = cfg.methods[0]
    for seed in cfg.seeds:
        mcfg = _model_config(cfg, method, train_set.obs_pos.shape[1], train_set.tgt_pos.shape[1], n_actions)
        tcfg = TrainConfig.from_dict({**cfg.train, "seed": seed, "foresight": cfg.k})
        model = EFTransformer(mcfg, seed=seed)
        run_dir = out / f"{method['name']}_seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        result = train(train_set, model, tcfg, log_path=run_dir / "loss.csv",
                       checkpoint_dir=run_dir, checkpoint_every=args.checkpoint_every)
        save_model(run_dir / "model.efck", model)
        print(f"{method['name']} seed {seed}: final loss {result.losses[-1]:.5f} -> {run_dir / 'model.efck'}")
    return 0


def _eval_rollout(args, cfg: ExperimentConfig):
    model = load_model(args.checkpoint)
    clips, n_actions = load_dataset(cfg.test_data)
    test_set = to_batch(clips)
    if model.cfg.n_actions != n_actions:
        raise ValueError("checkpoint and test data use different action vocabularies")
    return model, test_set, n_actions


def cmd_eval(args) -> int:
    cfg = experiment_config(args)
    model, test_set, n_actions = _eval_rollout(args, cfg)
    train_clips, _ = load_dataset(cfg.train_data)
    bins = compute_bins(train_clips, cfg.length_measure)
    rows = []
    for frames in [()] + list(cfg.spikes):
        spike = Spike(frames, cfg.spike_vector) if frames else None
        res = rollout(model, test_set, cfg.k, multi_task=cfg.multi_task, spike=spike)
        rep = _report(res, test_set, res.mode, bins, cfg.length_measure, n_actions)
        rows.extend(dict(r, mode=res.mode, condition=condition_name(frames))
                    for r in rep.rows(Path(args.checkpoint).stem, cfg.task, "-"))
        print(f"{condition_name(frames)}: MAD {rep.mad:.3f} FAD {rep.fad:.3f} macro-F1 {rep.macro_f1:.3f}")
    write_metrics_csv(_out(args) / "metrics.csv", rows)
    return 0


def cmd_rollout(args) -> int:
    cfg = experiment_config(args)
    model, test_set, _ = _eval_rollout(args, cfg)
    spike = Spike(cfg.spikes[0], cfg.spike_vector) if cfg.spikes else None
    res = rollout(model, test_set, cfg.k, multi_task=cfg.multi_task, spike=spike, mode=args.mode)
    out = _out(args)
    with open(out / "estimates.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clip_id", "frame", "target", "u", "v", "action"])
        for b, cid in enumerate(test_set.clip_ids):
            for j in range(res.positions.shape[1]):
                for t in range(res.positions.shape[2]):
                    u, v = res.positions[b, j, t]
                    w.writerow([cid, t + 1, j, repr(float(u)), repr(float(v)), int(res.actions[b, j, t])])
    n_plots = min(args.plots, len(test_set))
    for b in range(n_plots):
        wdt, hgt = test_set.wh[b]
        emit_svg(out / f"clip{b}.svg", test_set.obs_pos[b], test_set.tgt_pos[b],
                 {Path(args.checkpoint).stem: res.positions[b]}, float(wdt), float(hgt), test_set.clip_ids[b])
    print(f"wrote {out / 'estimates.csv'} and {n_plots} plot(s)")
    return 0


def cmd_robustness(args) -> int:
    cfg = experiment_config(args)
    if not cfg.spikes:
        cfg.spikes = list(DEFAULT_SPIKES)
    out = _out(args)
    result = run_experiment(cfg, out)
    for m in cfg.methods:
        line = [f"{m['name']}:"]
        for frames in [()] + list(cfg.spikes):
            cond = condition_name(frames)
            line.append(f"{cond} FAD {result.value(m['name'], 'FAD', cond):.2f}")
        print("  ".join(line))
    return 0


def cmd_ablate(args) -> int:
    cfg = experiment_config(args)
    out = _out(args)
    result = run_experiment(cfg, out)
    names = [m["name"] for m in cfg.methods]
    modes = sorted({m.get("output_mode", cfg.model.get("output_mode", "uvr")) for m in cfg.methods}
                   | set(cfg.decode_modes))
    text = variance_report(result, names, modes)
    (out / "report.txt").write_text(text)
    print(text, end="")
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "rollout": cmd_rollout,
            "robustness": cmd_robustness, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="efformer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default="runs", help="output directory")
        if name == "generate":
            continue
        sp.add_argument("--task", choices=["infer", "predict"])
        sp.add_argument("--k", type=int)
        sp.add_argument("--decoder", choices=DECODER_VARIANTS)
        sp.add_argument("--encoder", choices=ENCODER_VARIANTS)
        sp.add_argument("--mode", choices=OUTPUT_MODES)
        sp.add_argument("--spike", type=parse_spike, action="append",
                        help='e.g. "frames=6 vec=1,1,-1,-1,-1,-1"; repeatable')
        if name in ("eval", "rollout"):
            sp.add_argument("--checkpoint", required=True)
        if name == "train":
            sp.add_argument("--checkpoint-every", type=int, default=0)
        if name == "rollout":
            sp.add_argument("--plots", type=int, default=3, help="number of clips to draw")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, ClipFormatError, KeyError, TypeError) as exc:
        print(f"efformer {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
