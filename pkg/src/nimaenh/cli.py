"""Command-line surface: data generation, training, scoring, enhancement, eval.

Exit codes: 0 success, 2 usage/validation, 3 I/O or missing input,
4 numerical failure. Every command writes a run manifest into its output
directory before producing results, and reruns with identical flags and
inputs produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import subprocess
import sys

import numpy as np

from . import __version__
from .checkpoint import (
    CheckpointError,
    config_hash,
    load_can,
    load_nima,
    save_can,
    save_nima,
)
from .data import (
    ImageParseError,
    UnsupportedFormatError,
    load_pair_split,
    load_rated_split,
    make_datasets,
    read_image,
    write_datasets,
    write_image,
)
from .enhance import CanConfig, ImageTooSmallError, can_forward, check_min_size
from .quality import eval_metrics, nima_score
from .report import psnr, save_history_figure, save_score_stats_figure, write_csv
from .train import DivergenceError, TrainConfig, train_can, train_nima

DEFAULT_CAN_DEPTH = 7  # desk-scale default; depth 10 needs >=129 px images


class UsageError(ValueError):
    pass


def _version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _default_out(args) -> str:
    if getattr(args, "out", None):
        return args.out
    env = os.environ.get("NIMAENH_OUT")
    if env:
        return env
    raise UsageError("--out is required (or set NIMAENH_OUT)")


def _parse_size(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise UsageError(f"--size must look like 48x64, got {text!r}") from None


def _read_config_file(path) -> dict:
    """Flat key=value lines; '#' starts a comment."""
    values = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, raw = line.partition("=")
                values[key.strip()] = raw.strip()
    except FileNotFoundError:
        raise
    return values


def _coerce(raw: str, kind):
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "intlist":
        return [int(v) for v in raw.split(",") if v]
    return raw


_TRAIN_KEYS = {
    "gamma": "float", "optimizer": "str", "learning_rate": "float",
    "head_learning_rate": "float", "momentum": "float", "beta1": "float",
    "beta2": "float", "eps": "float", "batch_size": "int",
    "step_budget": "int", "decay_factor": "float",
    "decay_period_epochs": "int", "seed": "int",
}
_CAN_KEYS = {"depth": "int", "width": "int", "dilation_schedule": "intlist",
             "leaky_slope": "float"}


def _apply_config(base: TrainConfig, overrides: dict):
    train_kwargs = dataclasses.asdict(base)
    can_kwargs = {}
    for key, raw in overrides.items():
        if key in _TRAIN_KEYS:
            train_kwargs[key] = _coerce(raw, _TRAIN_KEYS[key])
        elif key in _CAN_KEYS:
            can_kwargs[key] = _coerce(raw, _CAN_KEYS[key])
        else:
            raise UsageError(f"unknown config key {key!r}")
    try:
        config = TrainConfig(**train_kwargs)
    except ValueError as e:
        raise UsageError(str(e)) from None
    return config, can_kwargs


def _write_run_manifest(out_dir, command, config: dict, seed, outputs):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": _version_string(),
        "outputs": outputs,
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _collect_images(paths):
    files = []
    for p in paths:
        if os.path.isdir(p):
            files.extend(
                os.path.join(p, f) for f in sorted(os.listdir(p))
                if f.endswith((".ppm", ".png"))
            )
        else:
            if not os.path.exists(p):
                raise FileNotFoundError(f"missing image path: {p}")
            files.append(p)
    if not files:
        raise UsageError("no input images found")
    return files


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    out = _default_out(args)
    height, width = _parse_size(args.size)
    min_extent = CanConfig(depth=DEFAULT_CAN_DEPTH).max_margin() + 1
    if height < min_extent or width < min_extent:
        raise UsageError(
            f"size {height}x{width} below the enhancer minimum of "
            f"{min_extent}x{min_extent} (depth {DEFAULT_CAN_DEPTH})"
        )
    if args.count < 10:
        raise UsageError("--count must be at least 10")
    _write_run_manifest(out, "gen-data",
                        {"seed": args.seed, "count": args.count, "size": args.size},
                        args.seed, ["manifest.csv"])
    rated, pairs = make_datasets(args.seed, args.count, (height, width))
    write_datasets(out, rated, pairs)
    print(f"wrote {args.count} rated images and {args.count} pairs to {out}")
    return 0


def cmd_train_nima(args) -> int:
    out = _default_out(args)
    overrides = _read_config_file(args.config) if args.config else {}
    config, _ = _apply_config(TrainConfig.default_nima(), overrides)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    dataset = load_rated_split(args.data, "train")
    if not dataset:
        raise FileNotFoundError(f"no rated training images under {args.data}")
    _write_run_manifest(out, "train-nima", dataclasses.asdict(config), config.seed,
                        ["nima.ckpt", "history.csv", "history.png"])
    model, history = train_nima(dataset, config)
    save_nima(os.path.join(out, "nima.ckpt"), model, step=config.step_budget,
              extra={"train_config_hash": config_hash(config)})
    write_csv(os.path.join(out, "history.csv"), ["epoch", "mean_loss", "lr"],
              [(r.epoch, r.mean_loss, r.lr) for r in history])
    save_history_figure(os.path.join(out, "history.png"), history,
                        title="quality-model training")
    print(f"trained quality model: final epoch loss {history[-1].mean_loss:.6f}")
    return 0


def cmd_train_can(args) -> int:
    out = _default_out(args)
    overrides = _read_config_file(args.config) if args.config else {}
    config, can_kwargs = _apply_config(TrainConfig.default_can(), overrides)
    if args.gamma is not None:
        config = dataclasses.replace(config, gamma=args.gamma)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    can_config = CanConfig(depth=DEFAULT_CAN_DEPTH, **can_kwargs) \
        if "depth" not in can_kwargs else CanConfig(**can_kwargs)
    nima = None
    if config.gamma > 0:
        if not args.nima:
            raise UsageError("--nima is required when gamma > 0")
        nima = load_nima(args.nima)
        nima.frozen = True
    pairs = load_pair_split(args.data, "train")
    if not pairs:
        raise FileNotFoundError(f"no training pairs under {args.data}")
    _write_run_manifest(out, "train-can",
                        {**dataclasses.asdict(config),
                         "can": dataclasses.asdict(can_config)},
                        config.seed, ["can.ckpt", "history.csv", "history.png"])
    model, history = train_can(pairs, nima, config, can_config=can_config)
    save_can(os.path.join(out, "can.ckpt"), model, step=config.step_budget,
             extra={"gamma": config.gamma})
    write_csv(os.path.join(out, "history.csv"),
              ["step", "fidelity", "gamma_q", "total"],
              [(r.step, r.fidelity, r.gamma_q, r.total) for r in history])
    save_history_figure(os.path.join(out, "history.png"), history,
                        title=f"enhancer training (gamma={config.gamma:g})")
    print(f"trained enhancer: final total loss {history[-1].total:.6e}")
    return 0


def cmd_score(args) -> int:
    model = load_nima(args.nima)
    files = _collect_images(args.images)
    rows = []
    for path in files:
        dist = model.predict(read_image(path))
        rows.append((path, nima_score(dist), *[float(p) for p in dist.probs]))
    header = ["path", "nima_score"] + [f"p{i}" for i in range(1, 11)]
    out_csv = args.out
    write_csv(out_csv, header, rows)
    print(f"scored {len(rows)} images -> {out_csv}")
    return 0


def cmd_enhance(args) -> int:
    out = _default_out(args)
    model = load_can(args.can)
    files = _collect_images(args.images)
    os.makedirs(out, exist_ok=True)
    for path in files:
        image = read_image(path)
        check_min_size(model.config, image.shape[0], image.shape[1])
        enhanced = np.clip(can_forward(model, image).data, 0.0, 1.0)
        stem, ext = os.path.splitext(os.path.basename(path))
        write_image(os.path.join(out, f"{stem}_enhanced{ext}"), enhanced)
    print(f"enhanced {len(files)} images -> {out}")
    return 0


def cmd_eval(args) -> int:
    out = _default_out(args)
    nima = load_nima(args.nima)
    can = load_can(args.can)
    baseline = load_can(args.can_baseline)
    rated_test = load_rated_split(args.data, "test")
    pair_test = load_pair_split(args.data, "test")
    if not rated_test or not pair_test:
        raise FileNotFoundError(f"no test split found under {args.data}")
    _write_run_manifest(out, "eval", {"data": args.data}, None,
                        ["metrics.csv", "method_stats.csv", "scores.csv",
                         "score_stats.png"])

    predicted = [nima.predict(item.image) for item in rated_test]
    report = eval_metrics(predicted, [item.rating for item in rated_test])
    write_csv(os.path.join(out, "metrics.csv"),
              ["two_class_accuracy", "lcc", "srcc", "mean_emd"],
              [(report.two_class_accuracy, report.lcc, report.srcc, report.mean_emd)])

    methods = ["input", "reference", "can_l2", "can_l2_nima"]
    score_rows = []
    per_method = {m: {"scores": [], "psnrs": []} for m in methods}
    for idx, pair in enumerate(pair_test):
        outputs = {
            "input": pair.input,
            "reference": pair.reference,
            "can_l2": np.clip(can_forward(baseline, pair.input).data, 0.0, 1.0),
            "can_l2_nima": np.clip(can_forward(can, pair.input).data, 0.0, 1.0),
        }
        for method in methods:
            score = nima.score(outputs[method])
            quality_psnr = psnr(outputs[method], pair.reference)
            per_method[method]["scores"].append(score)
            per_method[method]["psnrs"].append(quality_psnr)
            score_rows.append((idx, method, score, quality_psnr))
    write_csv(os.path.join(out, "scores.csv"),
              ["pair", "method", "nima_score", "psnr_db"], score_rows)

    stats = []
    stat_rows = []
    for method in methods:
        scores = np.array(per_method[method]["scores"])
        psnrs = np.array(per_method[method]["psnrs"])
        stats.append((method, float(scores.mean()), float(scores.std())))
        stat_rows.append((method, float(scores.mean()), float(scores.std()),
                          float(psnrs.mean())))
    write_csv(os.path.join(out, "method_stats.csv"),
              ["method", "mean_score", "std_score", "mean_psnr_db"], stat_rows)
    save_score_stats_figure(os.path.join(out, "score_stats.png"), stats)
    for method, mean, std, mean_psnr in stat_rows:
        print(f"{method:12s} score {mean:5.2f} +/- {std:4.2f}  psnr {mean_psnr:5.1f} dB")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nimaenh",
        description="perceptually guided image enhancement toolkit",
    )
    parser.add_argument("--version", action="version", version=_version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic datasets")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", default="48x64", help="image size HxW")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-nima", help="train the quality predictor")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_nima)

    p = sub.add_parser("train-can", help="train the enhancer")
    p.add_argument("--data", required=True)
    p.add_argument("--nima", help="frozen quality-model checkpoint (needed when gamma > 0)")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_can)

    p = sub.add_parser("score", help="score images with a quality checkpoint")
    p.add_argument("--nima", required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("enhance", help="run the enhancer over images")
    p.add_argument("--can", required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="per-method score statistics and metrics")
    p.add_argument("--nima", required=True)
    p.add_argument("--can", required=True)
    p.add_argument("--can-baseline", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ImageTooSmallError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError, ImageParseError,
            UnsupportedFormatError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
