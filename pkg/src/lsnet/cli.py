"""``lsnet`` command line: profile, train, infer, eval, efficiency, synth.

Exit codes: 0 success, 1 computation failure, 2 usage or input error.

Config precedence for every setting: command-line flag, then environment
(``LSNET_CONFIG`` for the config file, ``LSNET_TRAIN_<FIELD>`` for training
options), then the config file, then built-in defaults.
"""
import argparse
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checkpoint, report
from .config import ConfigError, builtin_config_text, builtin_spec, load_model_spec, tomllib
from .data import DatasetError, ImageError, index_dataset, load_image_pair, read_mask, write_gray
from .metrics import evaluate
from .model import LSNet
from .profiler import EntriesFormatError, count_flops, efficiency_metrics, parse_efficiency_entries
from .synth import SynthConfig, write_synthetic_dataset
from .tensor import ShapeError
from .train import TrainConfig, TrainingDiverged, train, train_config_from_env

log = logging.getLogger("lsnet")

BUILTIN_CONFIGS = ("canonical", "desk")


class UsageError(Exception):
    """Bad input from the user; maps to exit code 2."""


INPUT_ERRORS = (UsageError, ConfigError, DatasetError, ImageError, checkpoint.CheckpointError,
                EntriesFormatError, ShapeError, FileNotFoundError)


def _read_config(source):
    """(label, model spec, full TOML document) for a path or built-in name."""
    if source in BUILTIN_CONFIGS and not Path(source).exists():
        text = builtin_config_text(source)
        return f"builtin:{source}", builtin_spec(source), tomllib.loads(text)
    path = Path(source)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    spec = load_model_spec(path)
    return str(path), spec, tomllib.loads(path.read_text())


def _ensure_parent(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return Path(path)


def _config_source(flag, default):
    return flag or os.environ.get("LSNET_CONFIG") or default


# ---------------------------------------------------------------- profile

def cmd_profile(args):
    label, spec, _ = _read_config(_config_source(args.model, "canonical"))
    h, w = args.input_size
    shape = (args.batch, 3, h, w)
    config = {"model": label, "input_shape": list(shape), "convention": args.convention,
              "compare": args.compare, "spec": spec.to_dict()}
    try:
        variants = ("dense", "diff") if args.compare else (spec.fpn.variant,)
        summaries = {}
        for v in variants:
            summaries[v] = report.cost_summary(count_flops(spec.with_fpn(v), shape), v, args.convention)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.compare:
        result = {"dense": summaries["dense"], "diff": summaries["diff"],
                  "delta": {k: {"params": summaries["diff"][k]["params"] - summaries["dense"][k]["params"],
                                "gflops": summaries["diff"][k]["gflops"] - summaries["dense"][k]["gflops"]}
                            for k in ("fpn", "total")}}
        text = "\n\n".join([f"[dense]\n{report.cost_table(summaries['dense'])}",
                            f"[diff]\n{report.cost_table(summaries['diff'])}",
                            f"[diff - dense]\n{report.compare_table(summaries['dense'], summaries['diff'])}"])
    else:
        result = summaries[spec.fpn.variant]
        text = report.cost_table(result)
    if args.out:
        report.dump_json(_ensure_parent(args.out), "profile", config, result)
    return config, result, text


# ---------------------------------------------------------------- train

TRAIN_FLAGS = {"lr": "lr", "momentum": "momentum", "batch_size": "batch_size", "steps": "max_steps",
               "eval_interval": "eval_interval", "seed": "seed", "target_f1": "target_f1",
               "val_size": "val_size"}


def resolve_train_config(doc, args, environ=None):
    try:
        base = TrainConfig.from_mapping(doc.get("train", {}))
        cfg = train_config_from_env(base, environ)
        flags = {field: getattr(args, flag) for flag, field in TRAIN_FLAGS.items()
                 if getattr(args, flag, None) is not None}
        return TrainConfig.from_mapping({**asdict(cfg), **flags})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training options: {exc}") from exc


def cmd_train(args):
    label, spec, doc = _read_config(_config_source(args.config, "desk"))
    cfg = resolve_train_config(doc, args)
    if args.data:
        data = index_dataset(args.data, args.split)
        val = index_dataset(args.data, args.val_split) if args.val_split else None
        data_desc = {"root": str(data.root), "pairs": len(data), "warnings": data.warnings}
    else:
        try:
            data = SynthConfig(**{"seed": cfg.seed, **doc.get("synth", {})})
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid [synth] section: {exc}") from exc
        val = None
        data_desc = {"synthetic": asdict(data)}
    out = Path(args.out)
    history = Path(args.history) if args.history else out.with_name(out.name + ".history.jsonl")
    config = {"config": label, "model": spec.to_dict(), "train": asdict(cfg), "data": data_desc,
              "checkpoint": str(out), "history": str(history)}
    _ensure_parent(out)
    _ensure_parent(history)
    net = LSNet(spec, seed=cfg.seed)
    if val is not None:
        from .train import validation_set
        val = validation_set(val, cfg)
    start = time.perf_counter()
    result = train(net, data, cfg, ckpt_path=out, history_path=history, val=val)
    log.info("trained %d steps in %.1f s", result.steps, time.perf_counter() - start)
    summary = {"steps": result.steps, "best_val_f1": result.best_f1, "final": result.history[-1]}
    rows = [[h["step"], f"{h['loss']:.4f}", f"{h['val_f1']:.2f}"] for h in result.history]
    text = report.table(["step", "loss", "val F1"], rows) + f"\nbest val F1 {result.best_f1:.2f} -> {out}"
    return config, summary, text


# ---------------------------------------------------------------- infer

def _load_net(path):
    net = checkpoint.load_model(path)
    net.train(False)
    return net


def _predict(net, a, b):
    h, w = a.shape[2:]
    if h % 16 or w % 16:
        raise UsageError(f"image size {w}x{h} must be a multiple of 16")
    return net(a, b).data


def cmd_infer(args):
    if not 0 <= args.threshold:
        raise UsageError("threshold must be >= 0")
    net = _load_net(args.ckpt)
    a, b = load_image_pair(args.a, args.b)
    scores = _predict(net, a, b)[0, 0]
    out = Path(args.out)
    mask_path = Path(args.mask) if args.mask else out.with_name(out.stem + "_mask" + out.suffix)
    write_gray(_ensure_parent(out), scores)
    mask = scores >= args.threshold
    write_gray(_ensure_parent(mask_path), mask.astype(np.float64))
    config = {"ckpt": str(args.ckpt), "a": str(args.a), "b": str(args.b), "out": str(out),
              "mask": str(mask_path), "threshold": args.threshold}
    result = {"height": int(scores.shape[0]), "width": int(scores.shape[1]),
              "positive_fraction": float(mask.mean()), "score_min": float(scores.min()),
              "score_max": float(scores.max())}
    text = (f"score map {out} ({result['width']}x{result['height']})\n"
            f"mask {mask_path}: {100 * result['positive_fraction']:.2f}% changed")
    return config, result, text


# ---------------------------------------------------------------- eval

def cmd_eval(args):
    data = index_dataset(args.data, args.split)
    config = {"data": str(data.root), "split": args.split, "threshold": args.threshold,
              "per_image": args.per_image, "ckpt": str(args.ckpt) if args.ckpt else None,
              "pred": str(args.pred) if args.pred else None}
    if args.ckpt:
        net = _load_net(args.ckpt)

        def pairs():
            for i in range(len(data)):
                a, b, mask = data.load(i)
                yield _predict(net, a, b), mask
    else:
        pred_dir = Path(args.pred)
        if not pred_dir.is_dir():
            raise UsageError(f"prediction directory not found: {pred_dir}")

        def pairs():
            for rec in data:
                cands = sorted(p for p in pred_dir.glob(rec.name + ".*"))
                if not cands:
                    raise DatasetError(f"no prediction for {rec.name} in {pred_dir}")
                scores = read_mask_scores(cands[0])
                yield scores, read_mask(rec.mask)
    m = evaluate(pairs(), args.threshold, per_image=args.per_image)
    result = {"images": len(data), **m.to_dict()}
    if data.warnings:
        result["warnings"] = data.warnings
    return config, result, report.metrics_table(m) + f"\n({len(data)} image pairs)"


def read_mask_scores(path):
    """Greyscale prediction image as scores in [0, 1]."""
    from PIL import Image
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise ImageError(f"{path}: unreadable prediction ({exc})") from exc


# ---------------------------------------------------------------- efficiency / synth

def cmd_efficiency(args):
    path = Path(args.table)
    if not path.is_file():
        raise UsageError(f"entries file not found: {path}")
    try:
        entries = parse_efficiency_entries(path.read_text())
    except EntriesFormatError as exc:
        raise EntriesFormatError(exc.line, f"{path}: {exc.args[0].split(': ', 1)[1]}") from None
    rep = efficiency_metrics(entries)
    config = {"table": str(path), "entries": len(entries)}
    return config, rep.to_dict(), report.efficiency_table(rep)


def cmd_synth(args):
    try:
        cfg = SynthConfig(seed=args.seed, image_size=args.size)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    base = write_synthetic_dataset(args.out, cfg, args.count, args.start, args.split)
    config = {"out": str(args.out), "split": args.split, "count": args.count, "start": args.start,
              "synth": asdict(cfg)}
    return config, {"directory": str(base), "pairs": args.count}, f"wrote {args.count} pairs to {base}"


# ---------------------------------------------------------------- parser

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("table", "json"), default="table",
                        help="human tables (default) or a JSON document")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lsnet", description="Light Siamese change-detection toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", parents=[common], help="parameter and MAC counts")
    p.add_argument("--model", help="model config TOML, or a built-in name (canonical, desk)")
    p.add_argument("--input-size", nargs=2, type=_positive_int, default=(256, 256), metavar=("H", "W"))
    p.add_argument("--batch", type=_positive_int, default=1)
    p.add_argument("--compare", action="store_true", help="dense vs diff fusion side by side")
    p.add_argument("--convention", choices=("mac", "2mac"), default="mac")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("train", parents=[common], help="train on synthetic pairs or an A/B/OUT dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", action="store_true")
    src.add_argument("--data", help="dataset root with A/, B/, OUT/")
    p.add_argument("--split", default="train")
    p.add_argument("--val-split", help="validation split under --data (default: synthetic val or train)")
    p.add_argument("--config", help="run config TOML ([backbone]/[fpn]/[head]/[train]/[synth]) or built-in name")
    p.add_argument("--out", required=True, help="best-F1 checkpoint path")
    p.add_argument("--history", help="JSON-lines history (default: <out>.history.jsonl)")
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--steps", type=int)
    p.add_argument("--eval-interval", type=_positive_int)
    p.add_argument("--val-size", type=_positive_int)
    p.add_argument("--seed", type=int)
    p.add_argument("--target-f1", type=float, help="stop once validation F1 (percent) reaches this")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="score map and mask for one image pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", required=True, help="8-bit score map")
    p.add_argument("--mask", help="binary mask path (default: <out>_mask.<ext>)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="P / R / F1 / OA on a dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--pred", help="directory of greyscale score images named like OUT/")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--per-image", action="store_true", help="average per-image metrics")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("efficiency", parents=[common], help="F1-P / F1-G / F1-Eff ranking")
    p.add_argument("--table", required=True, help="CSV entries: name,f1,params_m,gflops")
    p.set_defaults(func=cmd_efficiency)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic A/B/OUT dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=_positive_int, default=100)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--split")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_positive_int, default=64)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage and 0 after --help
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config, result, text = args.func(args)
    except INPUT_ERRORS as exc:
        print(f"lsnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"lsnet {args.command}: training diverged: {exc}", file=sys.stderr)
        return 1
    except (ArithmeticError, RuntimeError, MemoryError, ValueError) as exc:
        print(f"lsnet {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    report.emit(args.command, config, result, text, args.format)
    return 0


if __name__ == "__main__":
    sys.exit(main())
